#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <random>
#include <vector>

#include "mebal/mebal.hpp"

namespace mebal::testing {

// Builds a Dataset from a covariate matrix whose first p1 columns are the
// error-prone block (one replicate per subject).
inline Dataset from_matrix(const Eigen::MatrixXd& z, const std::vector<int>& treat, Eigen::Index p1,
                           std::optional<Eigen::VectorXd> outcome = std::nullopt) {
  std::vector<Eigen::MatrixXd> x;
  for (Eigen::Index i = 0; i < z.rows(); ++i) x.push_back(z.row(i).head(p1));
  return Dataset(treat, std::move(outcome), z.rightCols(z.cols() - p1), std::move(x));
}

struct Instance {
  Dataset data;
  Eigen::MatrixXd z;  // true covariates
};

// Logistic-propensity instance: Z ~ N(0, I), logit P(T=1) = z'beta, Y = 1 + z'gamma + 2T + N(0,1).
// Replicates add N(0, sigma2) noise to the first p1 columns.
inline Instance random_instance(std::mt19937_64& rng, int n, Eigen::Index p1, Eigen::Index p2, int m = 1,
                                double sigma2 = 0.0, double beta_scale = 0.5) {
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> ud;
  const Eigen::Index p = p1 + p2;
  Eigen::VectorXd beta(p), gamma(p);
  for (Eigen::Index j = 0; j < p; ++j) {
    beta(j) = beta_scale * nd(rng);
    gamma(j) = nd(rng);
  }
  for (;;) {
    Eigen::MatrixXd z(n, p);
    for (int i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < p; ++j) z(i, j) = nd(rng);
    std::vector<int> treat(static_cast<std::size_t>(n));
    Eigen::VectorXd y(n);
    int n1 = 0;
    for (int i = 0; i < n; ++i) {
      const double pr = 1.0 / (1.0 + std::exp(-z.row(i).dot(beta)));
      treat[static_cast<std::size_t>(i)] = ud(rng) < pr ? 1 : 0;
      n1 += treat[static_cast<std::size_t>(i)];
      y(i) = 1.0 + z.row(i).dot(gamma) + 2.0 * treat[static_cast<std::size_t>(i)] + nd(rng);
    }
    if (n1 < 3 || n - n1 < 3) continue;
    std::vector<Eigen::MatrixXd> x;
    for (int i = 0; i < n; ++i) {
      Eigen::MatrixXd reps(m, p1);
      for (int r = 0; r < m; ++r)
        for (Eigen::Index j = 0; j < p1; ++j) reps(r, j) = z(i, j) + std::sqrt(sigma2) * nd(rng);
      x.push_back(reps);
    }
    return {Dataset(treat, y, z.rightCols(p2), std::move(x)), z};
  }
}

inline Eigen::VectorXd random_vector(std::mt19937_64& rng, Eigen::Index p, double scale = 1.0) {
  std::normal_distribution<double> nd;
  Eigen::VectorXd v(p);
  for (Eigen::Index j = 0; j < p; ++j) v(j) = scale * nd(rng);
  return v;
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); }

inline double max_rel_err(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return (a - b).cwiseAbs().maxCoeff() / std::max(1.0, b.cwiseAbs().maxCoeff());
}

// Central-difference gradient of a scalar function.
template <class F>
Eigen::VectorXd fd_gradient(F&& f, const Eigen::VectorXd& x, double h = 1e-5) {
  Eigen::VectorXd g(x.size());
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    Eigen::VectorXd xp = x, xm = x;
    xp(j) += h;
    xm(j) -= h;
    g(j) = (f(xp) - f(xm)) / (2.0 * h);
  }
  return g;
}

// Composite Simpson rule on [a, b] with `intervals` (even) subintervals.
template <class F>
double simpson(F&& f, double a, double b, int intervals = 2000) {
  const double h = (b - a) / intervals;
  double s = f(a) + f(b);
  for (int k = 1; k < intervals; ++k) s += (k % 2 ? 4.0 : 2.0) * f(a + k * h);
  return s * h / 3.0;
}

inline double sample_mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double sample_sd(const std::vector<double>& v) {
  const double m = sample_mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

}  // namespace mebal::testing
