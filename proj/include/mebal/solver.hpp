#pragma once

// Damped Newton minimizer and root finder shared by every estimator.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "mebal/error.hpp"

namespace mebal {

struct SolverConfig {
  double grad_tol = 1e-8;
  int max_iter = 200;
  double shrink = 0.5;
  double sufficient_decrease = 1e-4;
  int multi_start = 5;
  double restart_scale = 0.5;
  std::uint64_t seed = 0x5eedULL;

  void check() const {
    if (!(grad_tol > 0.0)) fail(ErrorCode::ConfigError, "grad_tol must be positive");
    if (max_iter < 1) fail(ErrorCode::ConfigError, "max_iter must be >= 1");
    if (!(shrink > 0.0 && shrink < 1.0)) fail(ErrorCode::ConfigError, "shrink must be in (0,1)");
    if (!(sufficient_decrease > 0.0 && sufficient_decrease < 0.5))
      fail(ErrorCode::ConfigError, "sufficient_decrease must be in (0,0.5)");
    if (multi_start < 0) fail(ErrorCode::ConfigError, "multi_start must be >= 0");
    if (!(restart_scale >= 0.0)) fail(ErrorCode::ConfigError, "restart_scale must be >= 0");
  }
};

struct Objective {
  double value = 0.0;
  Eigen::VectorXd grad;
  Eigen::MatrixXd hess;
};

struct SolveResult {
  Eigen::VectorXd x;
  double value = 0.0;  // objective (minimizer) or 0.5 * |F|^2 (root finder)
  double grad_norm = std::numeric_limits<double>::infinity();
  int iterations = 0;
  bool converged = false;
  std::vector<double> trace;  // accepted objective / merit values
  std::string message;
};

inline constexpr double kDivergenceNorm = 1e6;
inline constexpr int kMaxBacktracks = 60;

namespace detail {

// Evaluates `f`, mapping overflow-style failures to "not finite" so a line
// search can shrink past them.
template <class F>
bool try_eval(F& f, const Eigen::VectorXd& x, Objective& out) {
  try {
    out = f(x);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::NonFiniteExp || e.code() == ErrorCode::MgfUndefined) return false;
    throw;
  }
  return std::isfinite(out.value) && out.grad.allFinite();
}

template <class F>
bool try_eval_vec(F& f, const Eigen::VectorXd& x, Eigen::VectorXd& out) {
  try {
    out = f(x);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::NonFiniteExp || e.code() == ErrorCode::MgfUndefined) return false;
    throw;
  }
  return out.allFinite();
}

}  // namespace detail

// Central-difference Jacobian of a vector function, step 1e-6 relative.
template <class F>
Eigen::MatrixXd fd_jacobian(F&& f, const Eigen::VectorXd& x, double rel_step = 1e-6) {
  const Eigen::Index p = x.size();
  Eigen::MatrixXd jac;
  for (Eigen::Index j = 0; j < p; ++j) {
    const double h = rel_step * std::max(1.0, std::abs(x(j)));
    Eigen::VectorXd xp = x, xm = x;
    xp(j) += h;
    xm(j) -= h;
    const Eigen::VectorXd fp = f(xp);
    const Eigen::VectorXd fm = f(xm);
    if (j == 0) jac.resize(fp.size(), p);
    jac.col(j) = (fp - fm) / (2.0 * h);
  }
  return jac;
}

// Newton's method with backtracking (Armijo) line search.  The Hessian gets a
// 1e-10 ridge; an indefinite Hessian is replaced by its absolute-eigenvalue
// version, and steepest descent is the last resort.
template <class F>
SolveResult minimize_newton(F&& f, Eigen::VectorXd x0, const SolverConfig& cfg) {
  cfg.check();
  SolveResult res;
  res.x = std::move(x0);
  Objective cur;
  if (!detail::try_eval(f, res.x, cur)) {
    res.message = "objective not finite at start";
    return res;
  }
  res.trace.push_back(cur.value);
  const Eigen::Index p = res.x.size();
  for (int it = 0;; ++it) {
    res.iterations = it;
    res.value = cur.value;
    res.grad_norm = cur.grad.cwiseAbs().maxCoeff();
    if (res.grad_norm <= cfg.grad_tol) {
      res.converged = true;
      return res;
    }
    if (it >= cfg.max_iter) {
      res.message = "iteration limit reached";
      return res;
    }
    if (res.x.norm() > kDivergenceNorm) {
      res.message = "parameter diverging";
      return res;
    }
    Eigen::VectorXd dir;
    const Eigen::MatrixXd h = cur.hess + 1e-10 * Eigen::MatrixXd::Identity(p, p);
    Eigen::LLT<Eigen::MatrixXd> llt(h);
    if (llt.info() == Eigen::Success) {
      dir = -llt.solve(cur.grad);
    } else if (cur.hess.allFinite()) {
      // Indefinite: flip negative curvature (|lambda|, floored).
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (cur.hess + cur.hess.transpose()));
      const double floor = 1e-8 * std::max(1.0, eig.eigenvalues().cwiseAbs().maxCoeff());
      const Eigen::VectorXd inv = eig.eigenvalues().cwiseAbs().cwiseMax(floor).cwiseInverse();
      dir = -eig.eigenvectors() * (inv.asDiagonal() * (eig.eigenvectors().transpose() * cur.grad));
    }
    if (dir.size() == 0 || !dir.allFinite() || dir.dot(cur.grad) >= 0.0) dir = -cur.grad;
    const double slope = dir.dot(cur.grad);

    bool accepted = false;
    double step = 1.0;
    Objective next;
    // Predicted decrease below the roundoff of the objective: Armijo becomes a
    // coin flip, so judge the full step by the gradient instead.
    const double noise = 1e-12 * (1.0 + std::abs(cur.value));
    if (-slope <= noise) {
      const Eigen::VectorXd trial = res.x + dir;
      if (detail::try_eval(f, trial, next) && next.grad.cwiseAbs().maxCoeff() < res.grad_norm &&
          next.value <= cur.value + noise) {
        res.x = trial;
        cur = std::move(next);
        res.trace.push_back(cur.value);
        continue;
      }
    }
    for (int k = 0; k < kMaxBacktracks; ++k, step *= cfg.shrink) {
      const Eigen::VectorXd trial = res.x + step * dir;
      if (detail::try_eval(f, trial, next) &&
          next.value <= cur.value + cfg.sufficient_decrease * step * slope) {
        res.x = trial;
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      // Roundoff plateau near the optimum: take the full step if it still
      // shrinks the gradient.
      const Eigen::VectorXd trial = res.x + dir;
      if (detail::try_eval(f, trial, next) &&
          next.grad.cwiseAbs().maxCoeff() < res.grad_norm &&
          next.value <= cur.value + 1e-12 * (1.0 + std::abs(cur.value))) {
        res.x = trial;
      } else {
        res.message = "line search failed";
        return res;
      }
    }
    cur = std::move(next);
    res.trace.push_back(cur.value);
  }
}

// Damped Newton on F(x) = 0 with a finite-difference Jacobian and merit
// 0.5 |F|^2.  Singular Jacobians fall back to a Levenberg-Marquardt step.
template <class F>
SolveResult find_root(F&& f, Eigen::VectorXd x0, const SolverConfig& cfg) {
  cfg.check();
  SolveResult res;
  res.x = std::move(x0);
  Eigen::VectorXd fx;
  if (!detail::try_eval_vec(f, res.x, fx)) {
    res.message = "estimating function not finite at start";
    return res;
  }
  auto safe_f = [&f](const Eigen::VectorXd& x) -> Eigen::VectorXd { return f(x); };
  double merit = 0.5 * fx.squaredNorm();
  res.trace.push_back(merit);
  const Eigen::Index p = res.x.size();
  for (int it = 0;; ++it) {
    res.iterations = it;
    res.value = merit;
    res.grad_norm = fx.cwiseAbs().maxCoeff();
    if (res.grad_norm <= cfg.grad_tol) {
      res.converged = true;
      return res;
    }
    if (it >= cfg.max_iter) {
      res.message = "iteration limit reached";
      return res;
    }
    if (res.x.norm() > kDivergenceNorm) {
      res.message = "parameter diverging";
      return res;
    }
    Eigen::MatrixXd jac;
    try {
      jac = fd_jacobian(safe_f, res.x);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::NonFiniteExp) throw;
      res.message = "jacobian evaluation overflowed";
      return res;
    }
    Eigen::VectorXd dir;
    Eigen::FullPivLU<Eigen::MatrixXd> lu(jac);
    if (lu.isInvertible()) dir = -lu.solve(fx);
    const Eigen::VectorXd merit_grad = jac.transpose() * fx;
    if (dir.size() == 0 || !dir.allFinite() || dir.dot(merit_grad) >= 0.0) {
      const Eigen::MatrixXd jtj = jac.transpose() * jac;
      const double mu = 1e-6 * std::max(1.0, jtj.diagonal().maxCoeff());
      dir = -(jtj + mu * Eigen::MatrixXd::Identity(p, p)).ldlt().solve(merit_grad);
    }
    const double slope = dir.dot(merit_grad);
    bool accepted = false;
    double step = 1.0;
    Eigen::VectorXd next;
    for (int k = 0; k < kMaxBacktracks; ++k, step *= cfg.shrink) {
      const Eigen::VectorXd trial = res.x + step * dir;
      if (detail::try_eval_vec(f, trial, next)) {
        const double m = 0.5 * next.squaredNorm();
        if (m <= merit + cfg.sufficient_decrease * step * slope) {
          res.x = trial;
          merit = m;
          accepted = true;
          break;
        }
      }
    }
    if (!accepted) {
      res.message = "line search failed";
      return res;
    }
    fx = std::move(next);
    res.trace.push_back(merit);
  }
}

}  // namespace mebal
