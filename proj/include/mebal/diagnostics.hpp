#pragma once

// Covariate imbalance measures and the large-sample predictions for naive
// (error-ignoring) balancing: imbalance limits and coefficient bias.

#include <Eigen/Dense>

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "mebal/balancing.hpp"
#include "mebal/dataset.hpp"
#include "mebal/error.hpp"
#include "mebal/error_model.hpp"

namespace mebal {

enum class ImbalanceBasis { true_covariates, observed_covariates };

inline std::string_view to_string(ImbalanceBasis b) {
  return b == ImbalanceBasis::true_covariates ? "true_covariates" : "observed_covariates";
}

struct ImbalanceReport {
  std::vector<std::optional<double>> asmd;  // absent where the treated SD is zero
  std::optional<double> md;                 // absent when the treated covariance is singular
  ImbalanceBasis basis = ImbalanceBasis::observed_covariates;
  std::string weights_source;
  std::vector<std::string> flags;

  double max_asmd() const {
    double m = 0.0;
    for (const auto& a : asmd)
      if (a) m = std::max(m, *a);
    return m;
  }
};

// ASMD_j = |treated mean_j - sum_i w_i Z_ij| / treated SD_j and
// MD = sqrt(d' S_trt^{-1} d), both with the n1 - 1 divisor.
inline ImbalanceReport imbalance(const WeightVector& weights, const Eigen::MatrixXd& covariates,
                                 const Dataset& data,
                                 ImbalanceBasis basis = ImbalanceBasis::observed_covariates,
                                 std::string weights_source = {}) {
  if (static_cast<std::size_t>(covariates.rows()) != data.n())
    fail(ErrorCode::DimensionMismatch, "covariate rows differ from dataset size");
  if (weights.rows() != data.control_rows())
    fail(ErrorCode::DimensionMismatch, "weights are not aligned with the control rows");
  const TreatedMoments tm = treated_moments(covariates, data);
  Eigen::VectorXd weighted = Eigen::VectorXd::Zero(covariates.cols());
  for (std::size_t k = 0; k < weights.size(); ++k)
    weighted += weights.values()(static_cast<Eigen::Index>(k)) *
                covariates.row(static_cast<Eigen::Index>(weights.rows()[k])).transpose();
  const Eigen::VectorXd d = tm.mean - weighted;

  ImbalanceReport rep;
  rep.basis = basis;
  rep.weights_source = std::move(weights_source);
  rep.asmd.resize(static_cast<std::size_t>(covariates.cols()));
  for (Eigen::Index j = 0; j < covariates.cols(); ++j) {
    if (tm.sd(j) > 0.0) {
      rep.asmd[static_cast<std::size_t>(j)] = std::abs(d(j)) / tm.sd(j);
    } else {
      rep.flags.push_back("ZeroTreatedSd: column " + std::to_string(j));
    }
  }
  if (tm.singular_cov) {
    rep.flags.push_back("SingularTreatedCovariance");
  } else {
    rep.md = std::sqrt(std::max(0.0, d.dot(tm.cov.ldlt().solve(d))));
  }
  return rep;
}

struct ImbalanceLimits {
  Eigen::VectorXd asmd;
  double md = 0.0;
};

// Large-sample ASMD / MD of naive weights: |grad log M(theta*)_j| / sd_j and
// |S_trt^{-1/2} grad log M(theta*)|_2.  Coordinates beyond p1 are exactly 0.
inline ImbalanceLimits asymptotic_imbalance(const Eigen::VectorXd& theta_star, const ErrorModel& model,
                                            const Eigen::VectorXd& treated_sd,
                                            const Eigen::MatrixXd& treated_cov) {
  const Eigen::Index p = theta_star.size();
  if (treated_sd.size() != p || treated_cov.rows() != p || treated_cov.cols() != p)
    fail(ErrorCode::DimensionMismatch, "treated moments do not match theta");
  const Eigen::VectorXd g = log_mgf(model, theta_star).grad;
  ImbalanceLimits out;
  out.asmd = Eigen::VectorXd::Zero(p);
  for (Eigen::Index j = 0; j < model.p1(); ++j) {
    if (!(treated_sd(j) > 0.0)) fail(ErrorCode::InvalidArgument, "treated SD must be positive");
    out.asmd(j) = std::abs(g(j)) / treated_sd(j);
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (treated_cov + treated_cov.transpose()));
  const Eigen::VectorXd inv_sqrt = eig.eigenvalues().cwiseMax(kSingularTol).cwiseSqrt().cwiseInverse();
  const Eigen::VectorXd proj = inv_sqrt.asDiagonal() * (eig.eigenvectors().transpose() * g);
  out.md = proj.norm();
  return out;
}

struct BiasPrediction {
  Eigen::VectorXd theta0;        // H^{-1} (H + S) theta*
  Eigen::VectorXd bias;          // theta* - theta0
  Eigen::VectorXd theta0_block;  // same quantity from the partitioned form
};

// Predicted true coefficient and naive bias given an estimate `h_bar` of the
// averaged true-data Hessian.
inline BiasPrediction predict_naive_bias(const Eigen::VectorXd& theta_star, const ErrorModel& model,
                                         const Eigen::MatrixXd& h_bar) {
  const Eigen::Index p = theta_star.size(), p1 = model.p1(), p2 = p - p1;
  if (h_bar.rows() != p || h_bar.cols() != p) fail(ErrorCode::DimensionMismatch, "h_bar must be p x p");
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(h_bar, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const double smin = svd.singularValues().minCoeff();
  if (!(smin >= kSingularTol))
    fail(ErrorCode::SingularCorrection, "Hessian estimate has smallest singular value " + std::to_string(smin));
  const Eigen::MatrixXd sigma = model.sigma_full(p);
  BiasPrediction out;
  out.theta0 = svd.solve((h_bar + sigma) * theta_star);
  out.bias = theta_star - out.theta0;

  const Eigen::MatrixXd h_inv = svd.solve(Eigen::MatrixXd::Identity(p, p));
  const Eigen::VectorXd s1x = model.sigma1() * theta_star.head(p1);
  out.theta0_block.resize(p);
  out.theta0_block.head(p1) = theta_star.head(p1) + h_inv.topLeftCorner(p1, p1) * s1x;
  out.theta0_block.tail(p2) = theta_star.tail(p2) + h_inv.bottomLeftCorner(p2, p1) * s1x;
  return out;
}

// grad^2 L(theta*; O*) - Sigma, the plug-in for the averaged true-data Hessian.
inline Eigen::MatrixXd estimated_h_bar(const Eigen::VectorXd& theta_star, const Eigen::MatrixXd& z,
                                       const Dataset& data, const ErrorModel& model) {
  return eb_dual_objective(theta_star, make_problem(z, data)).hess - model.sigma_full(z.cols());
}

// Induced matrix norm for q in {1, 2, inf}; q <= 0 means inf.
inline double matrix_norm(const Eigen::MatrixXd& a, double q) {
  if (q == 1.0) return a.cwiseAbs().colwise().sum().maxCoeff();
  if (q == 2.0) return Eigen::JacobiSVD<Eigen::MatrixXd>(a).singularValues()(0);
  if (std::isinf(q) || q <= 0.0) return a.cwiseAbs().rowwise().sum().maxCoeff();
  fail(ErrorCode::InvalidArgument, "norm order must be 1, 2 or inf");
}

inline double vector_norm(const Eigen::VectorXd& v, double q) {
  if (q == 1.0) return v.lpNorm<1>();
  if (q == 2.0) return v.norm();
  if (std::isinf(q) || q <= 0.0) return v.lpNorm<Eigen::Infinity>();
  fail(ErrorCode::InvalidArgument, "norm order must be 1, 2 or inf");
}

// Estimated lower bound on |theta* - theta0|_q:
//   |grad log M(theta*)|_q / max_t |grad^2 L(tb; O*) - grad^2 log M(tb)|_q
// over `samples` evenly spaced points tb on the segment from theta* to
// `endpoint` (typically a corrected estimate).  A diagnostic, not a bound:
// both the endpoint and the Hessian are estimated.
inline double bias_lower_bound(const Eigen::VectorXd& theta_star, const Eigen::VectorXd& endpoint,
                               int samples, const ErrorModel& model, const Eigen::MatrixXd& z,
                               const Dataset& data, double q = 2.0) {
  if (samples < 1) fail(ErrorCode::InvalidArgument, "need at least one segment sample");
  if (endpoint.size() != theta_star.size()) fail(ErrorCode::DimensionMismatch, "endpoint length");
  const double num = vector_norm(log_mgf(model, theta_star).grad, q);
  if (num == 0.0) return 0.0;
  const BalanceProblem prob = make_problem(z, data);
  double sup = 0.0;
  for (int k = 0; k < samples; ++k) {
    const double t = samples == 1 ? 0.0 : static_cast<double>(k) / (samples - 1);
    const Eigen::VectorXd tb = theta_star + t * (endpoint - theta_star);
    const Eigen::MatrixXd h = eb_dual_objective(tb, prob).hess - log_mgf(model, tb).hess;
    sup = std::max(sup, matrix_norm(h, q));
  }
  if (!(sup >= kSingularTol))
    fail(ErrorCode::SingularCorrection, "corrected Hessian vanishes along the segment");
  return num / sup;
}

}  // namespace mebal
